#include "pseg/io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "json.hpp"

namespace pseg {

static_assert(std::endian::native == std::endian::little, "little-endian host required");

namespace {

constexpr std::size_t kHeaderSize = 348;
constexpr std::size_t kDataOffset = 352;
constexpr std::int16_t kDtUint8 = 2;
constexpr std::int16_t kDtInt16 = 4;
constexpr std::int16_t kDtFloat32 = 16;

template <typename T>
T load(const Bytes& bytes, std::size_t offset) {
    T value;
    std::memcpy(&value, bytes.data() + offset, sizeof(T));
    return value;
}

template <typename T>
void store(Bytes& bytes, std::size_t offset, T value) {
    std::memcpy(bytes.data() + offset, &value, sizeof(T));
}

bool is_gzip(const Bytes& bytes) {
    return bytes.size() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b;
}

struct Decoded {
    Dims dims;
    Spacing spacing;
    std::vector<double> values;
};

Decoded decode_nifti(const Bytes& bytes) {
    if (is_gzip(bytes)) fail(ErrorKind::compressed, "compressed not supported: gzip stream detected");
    if (bytes.size() < kHeaderSize) {
        fail(ErrorKind::truncated, "NIfTI header truncated: " + std::to_string(bytes.size()) + " bytes");
    }
    if (std::memcmp(bytes.data() + 344, "n+1\0", 4) != 0) fail(ErrorKind::format, "bad NIfTI-1 magic");
    if (load<std::int32_t>(bytes, 0) != 348) {
        fail(ErrorKind::unsupported, "sizeof_hdr != 348 (big-endian files are not supported)");
    }

    std::int16_t dim[8];
    for (int i = 0; i < 8; ++i) dim[i] = load<std::int16_t>(bytes, 40 + 2 * i);
    if (!(dim[0] == 3 || (dim[0] == 4 && dim[4] == 1))) {
        fail(ErrorKind::unsupported, "only 3D volumes are supported, dim[0]=" + std::to_string(dim[0]));
    }
    Dims dims{dim[1], dim[2], dim[3]};
    if (dims.nx <= 0 || dims.ny <= 0 || dims.nz <= 0) fail(ErrorKind::format, "non-positive dim in header");

    Spacing spacing{load<float>(bytes, 80), load<float>(bytes, 84), load<float>(bytes, 88)};
    const auto datatype = load<std::int16_t>(bytes, 70);
    std::size_t width = 0;
    switch (datatype) {
        case kDtUint8: width = 1; break;
        case kDtInt16: width = 2; break;
        case kDtFloat32: width = 4; break;
        default: fail(ErrorKind::unsupported, "unsupported NIfTI datatype " + std::to_string(datatype));
    }
    const auto vox_offset = static_cast<std::size_t>(load<float>(bytes, 108));
    if (vox_offset < kHeaderSize) fail(ErrorKind::format, "vox_offset inside header");
    const std::size_t expected = vox_offset + dims.voxels() * width;
    if (bytes.size() != expected) {
        fail(ErrorKind::truncated, "payload size mismatch: expected " + std::to_string(expected) +
                                       " bytes, got " + std::to_string(bytes.size()));
    }

    const float slope = load<float>(bytes, 112);
    const float inter = load<float>(bytes, 116);
    const bool scaled = slope != 0.0f && std::isfinite(slope);

    Decoded out{dims, spacing, std::vector<double>(dims.voxels())};
    const std::uint8_t* p = bytes.data() + vox_offset;
    for (std::size_t i = 0; i < out.values.size(); ++i) {
        double v = 0.0;
        switch (datatype) {
            case kDtUint8: v = p[i]; break;
            case kDtInt16: {
                std::int16_t s;
                std::memcpy(&s, p + 2 * i, 2);
                v = s;
                break;
            }
            default: {
                float f;
                std::memcpy(&f, p + 4 * i, 4);
                v = f;
            }
        }
        out.values[i] = scaled ? v * slope + inter : v;
    }
    return out;
}

Bytes encode_header(const Dims& dims, const Spacing& spacing, std::int16_t datatype, std::int16_t bitpix) {
    Bytes bytes(kDataOffset + dims.voxels() * static_cast<std::size_t>(bitpix / 8), 0);
    store<std::int32_t>(bytes, 0, 348);
    bytes[38] = 'r';
    const std::int16_t dim[8] = {3, static_cast<std::int16_t>(dims.nx), static_cast<std::int16_t>(dims.ny),
                                 static_cast<std::int16_t>(dims.nz), 1, 1, 1, 1};
    for (int i = 0; i < 8; ++i) store<std::int16_t>(bytes, 40 + 2 * i, dim[i]);
    store<std::int16_t>(bytes, 70, datatype);
    store<std::int16_t>(bytes, 72, bitpix);
    const float pixdim[8] = {1.0f, static_cast<float>(spacing.sx), static_cast<float>(spacing.sy),
                             static_cast<float>(spacing.sz), 1.0f, 1.0f, 1.0f, 1.0f};
    for (int i = 0; i < 8; ++i) store<float>(bytes, 76 + 4 * i, pixdim[i]);
    store<float>(bytes, 108, static_cast<float>(kDataOffset));
    store<float>(bytes, 112, 1.0f);
    store<float>(bytes, 116, 0.0f);
    bytes[123] = 2;  // xyzt_units: mm
    std::memcpy(bytes.data() + 344, "n+1\0", 4);
    return bytes;
}

void check_dims_fit_header(const Dims& dims) {
    if (dims.nx > 32767 || dims.ny > 32767 || dims.nz > 32767) {
        fail(ErrorKind::unsupported, "dimension exceeds NIfTI-1 int16 range");
    }
}

}  // namespace

VoxelGrid read_nifti1(const Bytes& bytes) {
    auto d = decode_nifti(bytes);
    return {d.dims, d.spacing, std::move(d.values), IntensityKind::raw};
}

Bytes write_nifti1(const VoxelGrid& grid) {
    check_dims_fit_header(grid.dims());
    Bytes bytes = encode_header(grid.dims(), grid.spacing(), kDtFloat32, 32);
    auto values = grid.values();
    for (std::size_t i = 0; i < values.size(); ++i) {
        store<float>(bytes, kDataOffset + 4 * i, static_cast<float>(values[i]));
    }
    return bytes;
}

LabelMask read_nifti1_mask(const Bytes& bytes) {
    auto d = decode_nifti(bytes);
    std::vector<std::uint8_t> labels(d.values.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const double v = d.values[i];
        if (!(v >= 0.0 && v < 256.0) || v != std::floor(v)) {
            fail(ErrorKind::format, "mask value " + std::to_string(v) + " is not a small non-negative integer");
        }
        labels[i] = static_cast<std::uint8_t>(v);
    }
    return {d.dims, d.spacing, std::move(labels)};
}

Bytes write_nifti1(const LabelMask& mask) {
    check_dims_fit_header(mask.dims());
    Bytes bytes = encode_header(mask.dims(), mask.spacing(), kDtUint8, 8);
    std::copy(mask.labels().begin(), mask.labels().end(), bytes.begin() + kDataOffset);
    return bytes;
}

// ---------------------------------------------------------------------------
// interchange

namespace {

const char* dtype_name(PayloadType t) {
    switch (t) {
        case PayloadType::uint8: return "uint8";
        case PayloadType::int16: return "int16";
        case PayloadType::float32: return "float32";
        case PayloadType::float64: return "float64";
    }
    return "?";
}

std::size_t dtype_width(const std::string& name) {
    if (name == "uint8") return 1;
    if (name == "int16") return 2;
    if (name == "float32") return 4;
    if (name == "float64") return 8;
    fail(ErrorKind::unsupported, "unsupported interchange dtype '" + name + "'");
}

Bytes frame(const nlohmann::json& meta, std::size_t payload_size) {
    const std::string head = meta.dump() + "\n";
    Bytes out(head.size() + payload_size);
    std::memcpy(out.data(), head.data(), head.size());
    return out;
}

struct Header {
    nlohmann::json meta;
    Dims dims;
    Spacing spacing;
    std::string dtype;
    std::size_t payload_offset = 0;
};

Header parse_header(const Bytes& bytes) {
    if (is_gzip(bytes)) fail(ErrorKind::compressed, "compressed not supported: gzip stream detected");
    auto nl = std::find(bytes.begin(), bytes.end(), std::uint8_t{'\n'});
    if (nl == bytes.end()) fail(ErrorKind::format, "interchange header has no terminating newline");
    Header h;
    try {
        h.meta = nlohmann::json::parse(bytes.begin(), nl);
        const auto& d = h.meta.at("dims");
        const auto& s = h.meta.at("spacing");
        if (d.size() != 3 || s.size() != 3) fail(ErrorKind::format, "dims/spacing must have 3 entries");
        h.dims = {d[0].get<int>(), d[1].get<int>(), d[2].get<int>()};
        h.spacing = {s[0].get<double>(), s[1].get<double>(), s[2].get<double>()};
        h.dtype = h.meta.at("dtype").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::format, std::string("malformed interchange header: ") + e.what());
    }
    if (h.dims.nx <= 0 || h.dims.ny <= 0 || h.dims.nz <= 0) fail(ErrorKind::format, "non-positive dims");
    h.payload_offset = static_cast<std::size_t>(nl - bytes.begin()) + 1;
    const std::size_t expected = h.payload_offset + h.dims.voxels() * dtype_width(h.dtype);
    if (bytes.size() != expected) {
        fail(ErrorKind::truncated, "payload size mismatch: expected " + std::to_string(expected) +
                                       " bytes, got " + std::to_string(bytes.size()));
    }
    return h;
}

std::vector<double> payload_values(const Bytes& bytes, const Header& h) {
    std::vector<double> values(h.dims.voxels());
    const std::uint8_t* p = bytes.data() + h.payload_offset;
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (h.dtype == "uint8") {
            values[i] = p[i];
        } else if (h.dtype == "int16") {
            std::int16_t s;
            std::memcpy(&s, p + 2 * i, 2);
            values[i] = s;
        } else if (h.dtype == "float32") {
            float f;
            std::memcpy(&f, p + 4 * i, 4);
            values[i] = f;
        } else {
            std::memcpy(&values[i], p + 8 * i, 8);
        }
    }
    return values;
}

}  // namespace

Bytes encode_interchange(const VoxelGrid& grid, PayloadType dtype) {
    const auto& d = grid.dims();
    const auto& s = grid.spacing();
    nlohmann::json meta = {{"dims", {d.nx, d.ny, d.nz}},
                           {"spacing", {s.sx, s.sy, s.sz}},
                           {"dtype", dtype_name(dtype)},
                           {"intensity_kind", to_string(grid.kind())}};
    const std::size_t width = dtype_width(dtype_name(dtype));
    Bytes out = frame(meta, d.voxels() * width);
    std::uint8_t* p = out.data() + (out.size() - d.voxels() * width);
    auto values = grid.values();
    for (std::size_t i = 0; i < values.size(); ++i) {
        switch (dtype) {
            case PayloadType::uint8: p[i] = static_cast<std::uint8_t>(std::lround(values[i])); break;
            case PayloadType::int16: {
                auto v = static_cast<std::int16_t>(std::lround(values[i]));
                std::memcpy(p + 2 * i, &v, 2);
                break;
            }
            case PayloadType::float32: {
                auto v = static_cast<float>(values[i]);
                std::memcpy(p + 4 * i, &v, 4);
                break;
            }
            case PayloadType::float64: std::memcpy(p + 8 * i, &values[i], 8); break;
        }
    }
    return out;
}

Bytes encode_interchange(const LabelMask& mask) {
    const auto& d = mask.dims();
    const auto& s = mask.spacing();
    nlohmann::json meta = {{"dims", {d.nx, d.ny, d.nz}},
                           {"spacing", {s.sx, s.sy, s.sz}},
                           {"dtype", "uint8"},
                           {"intensity_kind", "label"}};
    Bytes out = frame(meta, d.voxels());
    std::copy(mask.labels().begin(), mask.labels().end(), out.end() - static_cast<std::ptrdiff_t>(d.voxels()));
    return out;
}

VoxelGrid decode_interchange(const Bytes& bytes) {
    Header h = parse_header(bytes);
    auto kind_name = h.meta.value("intensity_kind", std::string("raw"));
    if (kind_name == "label") kind_name = "raw";
    VoxelGrid grid(h.dims, h.spacing, payload_values(bytes, h), intensity_kind_from_string(kind_name));
    grid.validate();
    return grid;
}

LabelMask decode_interchange_mask(const Bytes& bytes) {
    Header h = parse_header(bytes);
    auto values = payload_values(bytes, h);
    std::vector<std::uint8_t> labels(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (!(values[i] >= 0.0 && values[i] < 256.0) || values[i] != std::floor(values[i])) {
            fail(ErrorKind::format, "mask payload holds a non-label value");
        }
        labels[i] = static_cast<std::uint8_t>(values[i]);
    }
    return {h.dims, h.spacing, std::move(labels)};
}

Bytes read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::io, "cannot open '" + path + "'");
    return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file(const std::string& path, const Bytes& bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) fail(ErrorKind::io, "cannot write '" + path + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorKind::io, "short write to '" + path + "'");
}

namespace {

bool looks_like_nifti(const Bytes& bytes) {
    return bytes.size() >= kHeaderSize && std::memcmp(bytes.data() + 344, "n+1\0", 4) == 0;
}

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

}  // namespace

VoxelGrid load_volume(const std::string& path) {
    Bytes bytes = read_file(path);
    if (looks_like_nifti(bytes) || is_gzip(bytes)) return read_nifti1(bytes);
    return decode_interchange(bytes);
}

LabelMask load_mask(const std::string& path) {
    Bytes bytes = read_file(path);
    if (looks_like_nifti(bytes) || is_gzip(bytes)) return read_nifti1_mask(bytes);
    return decode_interchange_mask(bytes);
}

void save_volume(const std::string& path, const VoxelGrid& grid) {
    write_file(path, ends_with(path, ".nii") ? write_nifti1(grid) : encode_interchange(grid));
}

void save_mask(const std::string& path, const LabelMask& mask) {
    write_file(path, ends_with(path, ".nii") ? write_nifti1(mask) : encode_interchange(mask));
}

}  // namespace pseg
