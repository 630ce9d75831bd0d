#pragma once

// Single-file NIfTI-1 (.nii, .nii.gz) reading and writing.
//
// Supported payload types: uint8, int16, float32, float64. Volumes are
// written as float32 with dim[4] = channels. Displacement fields are written
// as dim = [5, nx, ny, nz, 1, 3] with the vector intent; components are in
// voxels along x, y, z. Orientation (qform/sform) is carried through but
// never applied; only pixdim is used, for spacing.

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "common.hpp"
#include "transform.hpp"
#include "volume.hpp"

namespace icreg {

namespace nifti {

inline constexpr int header_size = 348;
inline constexpr int data_offset = 352;

enum DataType : std::int16_t {
    uint8 = 2,
    int16 = 4,
    float32 = 16,
    float64 = 64,
};

inline constexpr std::int16_t intent_vector = 1007;

enum class Endian { little, big };

} // namespace nifti

struct NiftiHeader {
    std::array<std::int16_t, 8> dim{};
    std::int16_t datatype = nifti::float32;
    std::int16_t bitpix = 32;
    std::int16_t intent_code = 0;
    std::array<float, 8> pixdim{1, 1, 1, 1, 1, 1, 1, 1};
    float vox_offset = float(nifti::data_offset);
    float scl_slope = 1.0f;
    float scl_inter = 0.0f;
    char xyzt_units = 2; // mm
    std::string descrip;
    std::int16_t qform_code = 0;
    std::int16_t sform_code = 0;
    std::array<float, 6> quatern{}; // b, c, d, qoffset x, y, z
    std::array<std::array<float, 4>, 3> srow{};
    nifti::Endian endian = nifti::Endian::little;

    int ndim() const { return dim[0]; }
    std::size_t extent(int i) const { return i <= dim[0] ? std::size_t(dim[i]) : 1; }
    Vec3 spacing() const
    {
        Vec3 s{};
        for (int i = 0; i < 3; ++i)
            s[i] = pixdim[i + 1] > 0 && std::isfinite(pixdim[i + 1]) ? double(pixdim[i + 1]) : 1.0;
        return s;
    }
    bool has_spacing() const { return pixdim[1] > 0 && pixdim[2] > 0 && pixdim[3] > 0; }
};

namespace detail {

inline int bytes_per_voxel(std::int16_t datatype)
{
    switch (datatype) {
    case nifti::uint8: return 1;
    case nifti::int16: return 2;
    case nifti::float32: return 4;
    case nifti::float64: return 8;
    default: throw Error("nifti: unsupported datatype code " + std::to_string(datatype));
    }
}

/// Fixed-offset field codec for the 348-byte header.
class HeaderBytes {
public:
    HeaderBytes(unsigned char* p, bool swap) : p_(p), swap_(swap) {}

    template <class T>
    T get(int off) const
    {
        unsigned char b[sizeof(T)];
        std::memcpy(b, p_ + off, sizeof(T));
        if (swap_)
            std::reverse(b, b + sizeof(T));
        T v;
        std::memcpy(&v, b, sizeof(T));
        return v;
    }

    template <class T>
    void put(int off, T v)
    {
        unsigned char b[sizeof(T)];
        std::memcpy(b, &v, sizeof(T));
        if (swap_)
            std::reverse(b, b + sizeof(T));
        std::memcpy(p_ + off, b, sizeof(T));
    }

private:
    unsigned char* p_;
    bool swap_;
};

inline bool host_is_little()
{
    const std::uint16_t one = 1;
    unsigned char b;
    std::memcpy(&b, &one, 1);
    return b == 1;
}

inline NiftiHeader decode_header(std::array<unsigned char, nifti::header_size>& raw, const std::string& path)
{
    const bool little = host_is_little();
    bool swap = false;
    std::int32_t size = HeaderBytes(raw.data(), false).get<std::int32_t>(0);
    if (size != nifti::header_size) {
        swap = true;
        size = HeaderBytes(raw.data(), true).get<std::int32_t>(0);
        if (size != nifti::header_size)
            throw Error(path + ": not a NIfTI-1 file (sizeof_hdr is not 348 in either byte order)");
    }
    const char* magic = reinterpret_cast<const char*>(raw.data() + 344);
    if (std::memcmp(magic, "ni1\0", 4) == 0)
        throw Error(path + ": header/image pair files are not supported, expected single-file NIfTI");
    if (std::memcmp(magic, "n+1\0", 4) != 0)
        throw Error(path + ": bad NIfTI-1 magic");

    HeaderBytes h(raw.data(), swap);
    NiftiHeader hdr;
    hdr.endian = (little != swap) ? nifti::Endian::little : nifti::Endian::big;
    for (int i = 0; i < 8; ++i)
        hdr.dim[i] = h.get<std::int16_t>(40 + 2 * i);
    hdr.intent_code = h.get<std::int16_t>(68);
    hdr.datatype = h.get<std::int16_t>(70);
    hdr.bitpix = h.get<std::int16_t>(72);
    for (int i = 0; i < 8; ++i)
        hdr.pixdim[i] = h.get<float>(76 + 4 * i);
    hdr.vox_offset = h.get<float>(108);
    hdr.scl_slope = h.get<float>(112);
    hdr.scl_inter = h.get<float>(116);
    hdr.xyzt_units = static_cast<char>(raw[123]);
    hdr.descrip.assign(reinterpret_cast<const char*>(raw.data() + 148), strnlen(reinterpret_cast<const char*>(raw.data() + 148), 80));
    hdr.qform_code = h.get<std::int16_t>(252);
    hdr.sform_code = h.get<std::int16_t>(254);
    for (int i = 0; i < 6; ++i)
        hdr.quatern[i] = h.get<float>(256 + 4 * i);
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 4; ++c)
            hdr.srow[r][c] = h.get<float>(280 + 16 * r + 4 * c);

    if (hdr.dim[0] < 1 || hdr.dim[0] > 7)
        throw Error(path + ": unsupported dim[0] = " + std::to_string(hdr.dim[0]));
    for (int i = 1; i <= hdr.dim[0]; ++i)
        if (hdr.dim[i] < 1)
            throw Error(path + ": invalid dim[" + std::to_string(i) + "] = " + std::to_string(hdr.dim[i]));
    bytes_per_voxel(hdr.datatype);
    if (hdr.vox_offset < float(nifti::header_size))
        throw Error(path + ": vox_offset smaller than the header");
    return hdr;
}

inline std::array<unsigned char, nifti::header_size> encode_header(const NiftiHeader& hdr)
{
    std::array<unsigned char, nifti::header_size> raw{};
    const bool swap = (hdr.endian == nifti::Endian::little) != host_is_little();
    HeaderBytes h(raw.data(), swap);
    h.put<std::int32_t>(0, nifti::header_size);
    raw[38] = 'r';
    for (int i = 0; i < 8; ++i)
        h.put<std::int16_t>(40 + 2 * i, hdr.dim[i]);
    h.put<std::int16_t>(68, hdr.intent_code);
    h.put<std::int16_t>(70, hdr.datatype);
    h.put<std::int16_t>(72, hdr.bitpix);
    for (int i = 0; i < 8; ++i)
        h.put<float>(76 + 4 * i, hdr.pixdim[i]);
    h.put<float>(108, hdr.vox_offset);
    h.put<float>(112, hdr.scl_slope);
    h.put<float>(116, hdr.scl_inter);
    raw[123] = static_cast<unsigned char>(hdr.xyzt_units);
    std::memcpy(raw.data() + 148, hdr.descrip.data(), std::min<std::size_t>(hdr.descrip.size(), 79));
    h.put<std::int16_t>(252, hdr.qform_code);
    h.put<std::int16_t>(254, hdr.sform_code);
    for (int i = 0; i < 6; ++i)
        h.put<float>(256 + 4 * i, hdr.quatern[i]);
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 4; ++c)
            h.put<float>(280 + 16 * r + 4 * c, hdr.srow[r][c]);
    std::memcpy(raw.data() + 344, "n+1\0", 4);
    return raw;
}

/// Sequential reader over a plain or gzip-compressed file; gzip is
/// recognized by its two-byte signature.
class InputFile {
public:
    explicit InputFile(const std::string& path) : path_(path)
    {
        unsigned char sig[2] = {0, 0};
        {
            std::ifstream probe(path, std::ios::binary);
            if (!probe)
                throw Error(path + ": cannot open for reading");
            probe.read(reinterpret_cast<char*>(sig), 2);
        }
        if (sig[0] == 0x1f && sig[1] == 0x8b) {
            gz_ = gzopen(path.c_str(), "rb");
            if (!gz_)
                throw Error(path + ": cannot open gzip stream");
        } else {
            plain_.open(path, std::ios::binary);
        }
    }
    ~InputFile()
    {
        if (gz_)
            gzclose(gz_);
    }
    InputFile(const InputFile&) = delete;
    InputFile& operator=(const InputFile&) = delete;

    /// Reads up to n bytes; returns the count actually read.
    std::size_t read(void* dst, std::size_t n)
    {
        auto* out = static_cast<char*>(dst);
        std::size_t total = 0;
        while (total < n) {
            const std::size_t chunk = std::min<std::size_t>(n - total, 1u << 30);
            std::size_t got = 0;
            if (gz_) {
                const int r = gzread(gz_, out + total, static_cast<unsigned>(chunk));
                if (r < 0)
                    throw Error(path_ + ": gzip decode error");
                got = std::size_t(r);
            } else {
                plain_.read(out + total, std::streamsize(chunk));
                got = std::size_t(plain_.gcount());
            }
            total += got;
            if (got < chunk)
                break;
        }
        return total;
    }

private:
    std::string path_;
    gzFile gz_ = nullptr;
    std::ifstream plain_;
};

inline bool ends_with(const std::string& s, const std::string& suffix)
{
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

inline void write_bytes(const std::string& path, const std::vector<unsigned char>& bytes)
{
    if (ends_with(path, ".gz")) {
        gzFile gz = gzopen(path.c_str(), "wb6");
        if (!gz)
            throw Error(path + ": cannot open for writing");
        std::size_t done = 0;
        while (done < bytes.size()) {
            const auto chunk = static_cast<unsigned>(std::min<std::size_t>(bytes.size() - done, 1u << 30));
            if (gzwrite(gz, bytes.data() + done, chunk) != int(chunk)) {
                gzclose(gz);
                throw Error(path + ": write failed");
            }
            done += chunk;
        }
        if (gzclose(gz) != Z_OK)
            throw Error(path + ": write failed");
        return;
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw Error(path + ": cannot open for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!out)
        throw Error(path + ": write failed");
}

struct RawImage {
    NiftiHeader header;
    std::vector<double> values; // scaled, in file order
};

inline RawImage read_raw(const std::string& path)
{
    InputFile in(path);
    std::array<unsigned char, nifti::header_size> raw{};
    if (in.read(raw.data(), raw.size()) != raw.size())
        throw Error(path + ": file shorter than a NIfTI-1 header");
    RawImage img;
    img.header = decode_header(raw, path);
    const NiftiHeader& h = img.header;

    std::uint64_t count = 1;
    for (int i = 1; i <= h.dim[0]; ++i) {
        count *= std::uint64_t(h.dim[i]);
        if (count > (std::uint64_t(1) << 31))
            throw Error(path + ": image has more than 2^31 voxels");
    }
    const int bpv = bytes_per_voxel(h.datatype);
    const std::size_t payload = std::size_t(count) * std::size_t(bpv);

    std::vector<unsigned char> skip(std::size_t(h.vox_offset) - nifti::header_size);
    if (in.read(skip.data(), skip.size()) != skip.size())
        throw Error(path + ": truncated before vox_offset");
    std::vector<unsigned char> bytes(payload);
    const std::size_t got = in.read(bytes.data(), payload);
    if (got != payload)
        throw Error(path + ": truncated payload, expected " + std::to_string(payload) + " bytes, got " +
                    std::to_string(got));

    const bool swap = (h.endian == nifti::Endian::little) != host_is_little();
    const bool scaled = h.scl_slope != 0.0f && std::isfinite(h.scl_slope);
    const double slope = scaled ? h.scl_slope : 1.0, inter = scaled ? h.scl_inter : 0.0;
    img.values.resize(std::size_t(count));
    auto load = [&](auto tag, std::size_t i) {
        using T = decltype(tag);
        unsigned char b[sizeof(T)];
        std::memcpy(b, bytes.data() + i * sizeof(T), sizeof(T));
        if (swap)
            std::reverse(b, b + sizeof(T));
        T v;
        std::memcpy(&v, b, sizeof(T));
        return double(v);
    };
    for (std::size_t i = 0; i < img.values.size(); ++i) {
        double v = 0.0;
        switch (h.datatype) {
        case nifti::uint8: v = load(std::uint8_t{}, i); break;
        case nifti::int16: v = load(std::int16_t{}, i); break;
        case nifti::float32: v = load(float{}, i); break;
        case nifti::float64: v = load(double{}, i); break;
        }
        if (scaled)
            v = slope * v + inter;
        img.values[i] = v;
    }
    return img;
}

template <class Get>
std::vector<unsigned char> encode_image(const NiftiHeader& h, std::size_t count, Get&& value)
{
    const auto raw = encode_header(h);
    std::vector<unsigned char> bytes(nifti::data_offset + count * 4, 0);
    std::memcpy(bytes.data(), raw.data(), raw.size());
    const bool swap = (h.endian == nifti::Endian::little) != host_is_little();
    for (std::size_t i = 0; i < count; ++i) {
        const float f = static_cast<float>(value(i));
        unsigned char b[4];
        std::memcpy(b, &f, 4);
        if (swap)
            std::reverse(b, b + 4);
        std::memcpy(bytes.data() + nifti::data_offset + 4 * i, b, 4);
    }
    return bytes;
}

inline NiftiHeader output_header(const Dims& d, const Vec3& spacing, const NiftiHeader* reference)
{
    NiftiHeader h;
    if (reference) {
        h.qform_code = reference->qform_code;
        h.sform_code = reference->sform_code;
        h.quatern = reference->quatern;
        h.srow = reference->srow;
        h.pixdim[0] = reference->pixdim[0];
    } else {
        h.sform_code = 1;
        for (int r = 0; r < 3; ++r)
            h.srow[r][r] = float(spacing[r]);
    }
    h.dim = {3, std::int16_t(d.nx), std::int16_t(d.ny), std::int16_t(d.nz), 1, 1, 1, 1};
    for (int i = 0; i < 3; ++i)
        h.pixdim[i + 1] = float(spacing[i]);
    h.datatype = nifti::float32;
    h.bitpix = 32;
    return h;
}

inline void check_writable_dims(const Dims& d, std::size_t extra)
{
    if (d.nx > 32767 || d.ny > 32767 || d.nz > 32767 || extra > 32767)
        throw Error("nifti: dimension exceeds the int16 range of the format");
}

} // namespace detail

/// Reads the header only.
inline NiftiHeader read_nifti_header(const std::string& path)
{
    detail::InputFile in(path);
    std::array<unsigned char, nifti::header_size> raw{};
    if (in.read(raw.data(), raw.size()) != raw.size())
        throw Error(path + ": file shorter than a NIfTI-1 header");
    return detail::decode_header(raw, path);
}

/// Reads a 3D or 4D image; a 4th dimension becomes channels.
template <class Real = double>
Volume<Real> read_nifti(const std::string& path, NiftiHeader* header_out = nullptr)
{
    auto img = detail::read_raw(path);
    const NiftiHeader& h = img.header;
    for (int i = 5; i <= h.dim[0]; ++i)
        if (h.dim[i] != 1)
            throw Error(path + ": dim[" + std::to_string(i) + "] = " + std::to_string(h.dim[i]) +
                        " is not supported for volumes");
    const Dims d{h.extent(1), h.extent(2), h.extent(3)};
    const std::size_t channels = h.extent(4);
    Volume<Real> v(channels, d, h.spacing());
    auto dst = v.data();
    for (std::size_t i = 0; i < dst.size(); ++i) {
        if (!std::isfinite(img.values[i]))
            throw Error(path + ": non-finite voxel value at flat index " + std::to_string(i));
        dst[i] = static_cast<Real>(img.values[i]);
    }
    if (header_out)
        *header_out = h;
    return v;
}

/// Reads a displacement field: dim = [5, nx, ny, nz, 1, 3] (or a 4D image
/// whose 4th dimension is 3).
template <class Real = double>
DisplacementField<Real> read_field(const std::string& path, NiftiHeader* header_out = nullptr)
{
    auto img = detail::read_raw(path);
    const NiftiHeader& h = img.header;
    const bool five_d = h.dim[0] == 5 && h.dim[4] == 1 && h.dim[5] == 3;
    const bool four_d = h.dim[0] == 4 && h.dim[4] == 3;
    if (!five_d && !four_d)
        throw Error(path + ": not a displacement field (expected dim [5, nx, ny, nz, 1, 3])");
    const Dims d{h.extent(1), h.extent(2), h.extent(3)};
    DisplacementField<Real> u(d, h.spacing());
    auto dst = u.data();
    for (std::size_t i = 0; i < dst.size(); ++i)
        dst[i] = static_cast<Real>(img.values[i]);
    u.check_finite();
    if (header_out)
        *header_out = h;
    return u;
}

/// Writes a volume as float32; `.gz` suffix selects gzip. Orientation is
/// copied from `reference` when given.
template <class Real>
void write_nifti(const Volume<Real>& v, const std::string& path, const NiftiHeader* reference = nullptr,
                 nifti::Endian endian = nifti::Endian::little)
{
    detail::check_writable_dims(v.dims(), v.channels());
    NiftiHeader h = detail::output_header(v.dims(), v.spacing(), reference);
    if (v.channels() > 1) {
        h.dim[0] = 4;
        h.dim[4] = std::int16_t(v.channels());
    }
    h.endian = endian;
    auto data = v.data();
    detail::write_bytes(path, detail::encode_image(h, data.size(), [&](std::size_t i) { return data[i]; }));
}

template <class Real>
void write_nifti(const DisplacementField<Real>& u, const std::string& path, const NiftiHeader* reference = nullptr,
                 nifti::Endian endian = nifti::Endian::little)
{
    detail::check_writable_dims(u.dims(), 3);
    NiftiHeader h = detail::output_header(u.dims(), u.spacing(), reference);
    h.dim[0] = 5;
    h.dim[4] = 1;
    h.dim[5] = 3;
    h.intent_code = nifti::intent_vector;
    h.descrip = "displacement in voxels, components x,y,z";
    h.endian = endian;
    auto data = u.data();
    detail::write_bytes(path, detail::encode_image(h, data.size(), [&](std::size_t i) { return data[i]; }));
}

} // namespace icreg
