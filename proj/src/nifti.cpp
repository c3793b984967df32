#include "medlsdm/nifti.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <vector>

#include "medlsdm/errors.hpp"

namespace medlsdm {

namespace {

#pragma pack(push, 1)
struct Nifti1Header {
    int32_t sizeof_hdr;    /* 0   must be 348 */
    char data_type[10];    /* 4   unused */
    char db_name[18];      /* 14  unused */
    int32_t extents;       /* 32  unused */
    int16_t session_error; /* 36  unused */
    char regular;          /* 38  unused */
    char dim_info;         /* 39 */
    int16_t dim[8];        /* 40  dim[0] = rank */
    float intent_p1;       /* 56 */
    float intent_p2;       /* 60 */
    float intent_p3;       /* 64 */
    int16_t intent_code;   /* 68 */
    int16_t datatype;      /* 70 */
    int16_t bitpix;        /* 72 */
    int16_t slice_start;   /* 74 */
    float pixdim[8];       /* 76 */
    float vox_offset;      /* 108 */
    float scl_slope;       /* 112 */
    float scl_inter;       /* 116 */
    int16_t slice_end;     /* 120 */
    char slice_code;       /* 122 */
    char xyzt_units;       /* 123 */
    float cal_max;         /* 124 */
    float cal_min;         /* 128 */
    float slice_duration;  /* 132 */
    float toffset;         /* 136 */
    int32_t glmax;         /* 140 */
    int32_t glmin;         /* 144 */
    char descrip[80];      /* 148 */
    char aux_file[24];     /* 228 */
    int16_t qform_code;    /* 252 */
    int16_t sform_code;    /* 254 */
    float quatern_b;       /* 256 */
    float quatern_c;       /* 260 */
    float quatern_d;       /* 264 */
    float qoffset_x;       /* 268 */
    float qoffset_y;       /* 272 */
    float qoffset_z;       /* 276 */
    float srow_x[4];       /* 280 */
    float srow_y[4];       /* 296 */
    float srow_z[4];       /* 312 */
    char intent_name[16];  /* 328 */
    char magic[4];         /* 344  "n+1\0" for single-file */
};
#pragma pack(pop)
static_assert(sizeof(Nifti1Header) == 348, "NIfTI-1 header must be 348 bytes");

int bytes_per_voxel(NiftiDtype dt) {
    switch (dt) {
        case NiftiDtype::Uint8: return 1;
        case NiftiDtype::Int16: return 2;
        case NiftiDtype::Float32: return 4;
    }
    return 0;
}

}  // namespace

NiftiImage load_nifti(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw DataError("nifti: cannot open " + path);

    Nifti1Header hdr{};
    in.read(reinterpret_cast<char*>(&hdr), sizeof(hdr));
    if (!in)
        throw DataError("nifti: truncated header in " + path);

    if (hdr.sizeof_hdr != 348) {
        if (hdr.sizeof_hdr == 1543569408)  // byte-swapped 348
            throw DataError("nifti: big-endian file not supported: " + path);
        throw DataError("nifti: bad sizeof_hdr " + std::to_string(hdr.sizeof_hdr) + " in " + path);
    }
    if (std::memcmp(hdr.magic, "n+1", 4) != 0)
        throw DataError("nifti: bad magic (expected \"n+1\" single-file layout) in " + path);

    const int16_t rank = hdr.dim[0];
    if (rank < 3 || rank > 4)
        throw DataError("nifti: unsupported rank " + std::to_string(rank) + " in " + path);
    const int64_t H = hdr.dim[1], W = hdr.dim[2], L = hdr.dim[3];
    const int64_t C = rank == 4 ? hdr.dim[4] : 1;
    if (H < 1 || W < 1 || L < 1 || C < 1)
        throw DataError("nifti: non-positive dimension in " + path);

    NiftiDtype dt;
    switch (hdr.datatype) {
        case 2: dt = NiftiDtype::Uint8; break;
        case 4: dt = NiftiDtype::Int16; break;
        case 16: dt = NiftiDtype::Float32; break;
        default:
            throw DataError("nifti: unsupported datatype " + std::to_string(hdr.datatype) +
                            " in " + path + " (supported: uint8, int16, float32)");
    }

    const int64_t offset = static_cast<int64_t>(hdr.vox_offset);
    if (offset < 348)
        throw DataError("nifti: vox_offset " + std::to_string(offset) + " below header size");
    const int64_t numel = H * W * L * C;
    const int64_t bytes = numel * bytes_per_voxel(dt);

    in.seekg(0, std::ios::end);
    const int64_t file_size = static_cast<int64_t>(in.tellg());
    if (file_size < offset + bytes)
        throw DataError("nifti: corrupt file (payload truncated, need " +
                        std::to_string(offset + bytes) + " bytes, have " +
                        std::to_string(file_size) + "): " + path);
    in.seekg(offset, std::ios::beg);

    std::vector<char> raw(static_cast<size_t>(bytes));
    in.read(raw.data(), bytes);
    if (!in)
        throw DataError("nifti: corrupt file (read failed): " + path);

    NiftiImage img;
    img.dtype   = dt;
    img.spacing = {hdr.pixdim[1], hdr.pixdim[2], hdr.pixdim[3]};
    for (double& s : img.spacing)
        if (!(s > 0.0))
            s = 1.0;
    img.data = Tensor({H, W, L, C});

    // File order: H fastest, then W, L, C.
    int64_t src = 0;
    for (int64_t c = 0; c < C; ++c)
        for (int64_t l = 0; l < L; ++l)
            for (int64_t w = 0; w < W; ++w)
                for (int64_t h = 0; h < H; ++h, ++src) {
                    double v = 0.0;
                    switch (dt) {
                        case NiftiDtype::Uint8:
                            v = static_cast<double>(
                                static_cast<uint8_t>(raw[static_cast<size_t>(src)]));
                            break;
                        case NiftiDtype::Int16: {
                            int16_t x;
                            std::memcpy(&x, raw.data() + src * 2, 2);
                            v = static_cast<double>(x);
                            break;
                        }
                        case NiftiDtype::Float32: {
                            float x;
                            std::memcpy(&x, raw.data() + src * 4, 4);
                            v = static_cast<double>(x);
                            break;
                        }
                    }
                    img.data.at(h, w, l, c) = v;
                }
    return img;
}

Volume load_volume(const std::string& path) {
    NiftiImage img = load_nifti(path);
    Volume v;
    v.data            = std::move(img.data);
    v.spacing         = img.spacing;
    v.intensity_range = {v.data.min(), v.data.max()};
    return v;
}

SemanticMap load_semantic_map(const std::string& path, int32_t num_classes) {
    NiftiImage img = load_nifti(path);
    if (img.dtype == NiftiDtype::Float32)
        throw DataError("semantic map must use an integer datatype: " + path);
    if (img.data.dim(3) != 1)
        throw DataError("semantic map must be single-channel: " + path);
    SemanticMap m;
    m.H = img.data.dim(0);
    m.W = img.data.dim(1);
    m.L = img.data.dim(2);
    m.labels.resize(static_cast<size_t>(m.H * m.W * m.L));
    int32_t max_label = 0;
    for (int64_t i = 0; i < img.data.numel(); ++i) {
        const int32_t lab = static_cast<int32_t>(img.data[i]);
        if (lab < 0)
            throw DataError("semantic map has negative label: " + path);
        m.labels[static_cast<size_t>(i)] = lab;
        max_label                        = std::max(max_label, lab);
    }
    m.num_classes = num_classes > 0 ? num_classes : max_label + 1;
    m.validate();
    return m;
}

namespace {

void write_payload(std::ofstream& out, const Tensor& data, NiftiDtype dt) {
    const int64_t H = data.dim(0), W = data.dim(1), L = data.dim(2), C = data.dim(3);
    std::vector<char> raw(static_cast<size_t>(data.numel() * bytes_per_voxel(dt)));
    int64_t dst = 0;
    for (int64_t c = 0; c < C; ++c)
        for (int64_t l = 0; l < L; ++l)
            for (int64_t w = 0; w < W; ++w)
                for (int64_t h = 0; h < H; ++h, ++dst) {
                    const double v = data.at(h, w, l, c);
                    switch (dt) {
                        case NiftiDtype::Uint8: {
                            const uint8_t x = static_cast<uint8_t>(std::llround(v));
                            raw[static_cast<size_t>(dst)] = static_cast<char>(x);
                            break;
                        }
                        case NiftiDtype::Int16: {
                            const int16_t x = static_cast<int16_t>(std::llround(v));
                            std::memcpy(raw.data() + dst * 2, &x, 2);
                            break;
                        }
                        case NiftiDtype::Float32: {
                            const float x = static_cast<float>(v);
                            std::memcpy(raw.data() + dst * 4, &x, 4);
                            break;
                        }
                    }
                }
    out.write(raw.data(), static_cast<std::streamsize>(raw.size()));
}

void save_nifti_impl(const Tensor& data, std::array<double, 3> spacing, NiftiDtype dtype,
                     const std::string& path) {
    if (!data.all_finite())
        throw DataError("nifti save: volume contains non-finite values");

    Nifti1Header hdr{};
    hdr.sizeof_hdr = 348;
    hdr.regular    = 'r';
    const int64_t C = data.dim(3);
    hdr.dim[0] = C > 1 ? 4 : 3;
    hdr.dim[1] = static_cast<int16_t>(data.dim(0));
    hdr.dim[2] = static_cast<int16_t>(data.dim(1));
    hdr.dim[3] = static_cast<int16_t>(data.dim(2));
    hdr.dim[4] = static_cast<int16_t>(C > 1 ? C : 1);
    for (int i = hdr.dim[0] + 1; i < 8; ++i)
        hdr.dim[i] = 1;
    hdr.datatype   = static_cast<int16_t>(dtype);
    hdr.bitpix     = static_cast<int16_t>(8 * bytes_per_voxel(dtype));
    hdr.pixdim[0]  = 1.0f;
    hdr.pixdim[1]  = static_cast<float>(spacing[0]);
    hdr.pixdim[2]  = static_cast<float>(spacing[1]);
    hdr.pixdim[3]  = static_cast<float>(spacing[2]);
    hdr.pixdim[4]  = 1.0f;
    hdr.vox_offset = 352.0f;
    hdr.scl_slope  = 1.0f;
    hdr.scl_inter  = 0.0f;
    std::memcpy(hdr.magic, "n+1", 4);

    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw DataError("nifti save: cannot open " + path + " for writing");
    out.write(reinterpret_cast<const char*>(&hdr), sizeof(hdr));
    const char ext[4] = {0, 0, 0, 0};  // no header extensions
    out.write(ext, 4);
    write_payload(out, data, dtype);
    if (!out)
        throw DataError("nifti save: write failed for " + path);
}

}  // namespace

void save_nifti(const Volume& v, const std::string& path, NiftiDtype dtype) {
    save_nifti_impl(v.data, v.spacing, dtype, path);
}

void save_nifti(const SemanticMap& m, const std::string& path, std::array<double, 3> spacing) {
    m.validate();
    Tensor data({m.H, m.W, m.L, 1});
    for (int64_t i = 0; i < data.numel(); ++i)
        data[i] = static_cast<double>(m.labels[static_cast<size_t>(i)]);
    save_nifti_impl(data, spacing, NiftiDtype::Int16, path);
}

}  // namespace medlsdm
