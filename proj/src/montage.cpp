#include "medlsdm/montage.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <vector>

#include "medlsdm/errors.hpp"

namespace medlsdm {

namespace {

struct GrayImage {
    int64_t height = 0, width = 0;
    std::vector<uint8_t> pixels;

    uint8_t& at(int64_t r, int64_t c) { return pixels[static_cast<size_t>(r * width + c)]; }
};

void write_pgm(const GrayImage& img, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw DataError("montage: cannot open " + path);
    out << "P5\n" << img.width << " " << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.pixels.data()),
              static_cast<std::streamsize>(img.pixels.size()));
}

// value accessor already mapped to [0, 255]
using VoxelFn = std::function<uint8_t(int64_t h, int64_t w, int64_t l)>;

GrayImage render(int64_t H, int64_t W, int64_t L, int64_t cols, const VoxelFn& voxel) {
    cols = std::max<int64_t>(1, cols);
    // plane tile sizes: axial (H x W), coronal (W x L), sagittal (H x L)
    const int64_t pad        = 2;
    const int64_t row_h[3]   = {H, L, L};
    const int64_t row_w[3]   = {W, W, H};
    const int64_t n_axial    = std::min(cols, L);
    const int64_t n_coronal  = std::min(cols, H);
    const int64_t n_sagittal = std::min(cols, W);
    const int64_t counts[3]  = {n_axial, n_coronal, n_sagittal};

    int64_t total_w = 0, total_h = pad;
    for (int r = 0; r < 3; ++r) {
        total_w = std::max(total_w, counts[r] * (row_w[r] + pad) + pad);
        total_h += row_h[r] + pad;
    }

    GrayImage img;
    img.height = total_h;
    img.width  = total_w;
    img.pixels.assign(static_cast<size_t>(total_h * total_w), 0);

    const auto pick = [](int64_t i, int64_t n_tiles, int64_t extent) {
        return n_tiles == 1 ? extent / 2 : i * (extent - 1) / (n_tiles - 1);
    };

    int64_t oy = pad;
    for (int r = 0; r < 3; ++r) {
        for (int64_t i = 0; i < counts[r]; ++i) {
            const int64_t ox = pad + i * (row_w[r] + pad);
            for (int64_t y = 0; y < row_h[r]; ++y)
                for (int64_t x = 0; x < row_w[r]; ++x) {
                    uint8_t v = 0;
                    if (r == 0)  // axial: fixed l
                        v = voxel(y, x, pick(i, counts[r], L));
                    else if (r == 1)  // coronal: fixed h
                        v = voxel(pick(i, counts[r], H), x, y);
                    else  // sagittal: fixed w
                        v = voxel(y, pick(i, counts[r], W), x);
                    img.at(oy + y, ox + x) = v;
                }
        }
        oy += row_h[r] + pad;
    }
    return img;
}

}  // namespace

void write_montage(const Volume& v, const std::string& path, int64_t cols) {
    const int64_t H = v.height(), W = v.width(), L = v.depth();
    GrayImage img = render(H, W, L, cols, [&](int64_t h, int64_t w, int64_t l) {
        const double x = std::clamp(v.data.at(h, w, l, 0), -1.0, 1.0);
        return static_cast<uint8_t>(std::lround((x + 1.0) * 127.5));
    });
    write_pgm(img, path);
}

void write_montage(const SemanticMap& m, const std::string& path, int64_t cols) {
    const double scale = m.num_classes > 1 ? 255.0 / (m.num_classes - 1) : 255.0;
    GrayImage img = render(m.H, m.W, m.L, cols, [&](int64_t h, int64_t w, int64_t l) {
        return static_cast<uint8_t>(std::lround(m.at(h, w, l) * scale));
    });
    write_pgm(img, path);
}

}  // namespace medlsdm
