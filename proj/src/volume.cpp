#include "medlsdm/volume.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "medlsdm/errors.hpp"
#include "medlsdm/nifti.hpp"

namespace medlsdm {

void SemanticMap::validate() const {
    if (H < 1 || W < 1 || L < 1)
        throw ShapeError("semantic map: non-positive shape");
    if (num_classes < 1)
        throw DataError("semantic map: num_classes must be positive");
    if (static_cast<int64_t>(labels.size()) != H * W * L)
        throw ShapeError("semantic map: label count does not match shape");
    for (int32_t lab : labels)
        if (lab < 0 || lab >= num_classes)
            throw DataError("semantic map: label " + std::to_string(lab) +
                            " outside [0, " + std::to_string(num_classes) + ")");
}

namespace {

Tensor center_crop(const Tensor& data, std::array<int64_t, 3> target) {
    const int64_t H = data.dim(0), W = data.dim(1), L = data.dim(2), C = data.dim(3);
    const int64_t th = std::min(H, target[0]), tw = std::min(W, target[1]),
                  tl = std::min(L, target[2]);
    if (th == H && tw == W && tl == L)
        return data;
    const int64_t oh = (H - th) / 2, ow = (W - tw) / 2, ol = (L - tl) / 2;
    Tensor out({th, tw, tl, C});
    for (int64_t h = 0; h < th; ++h)
        for (int64_t w = 0; w < tw; ++w)
            for (int64_t l = 0; l < tl; ++l)
                for (int64_t c = 0; c < C; ++c)
                    out.at(h, w, l, c) = data.at(h + oh, w + ow, l + ol, c);
    return out;
}

Tensor resample_trilinear(const Tensor& data, std::array<int64_t, 3> target) {
    const int64_t H = data.dim(0), W = data.dim(1), L = data.dim(2), C = data.dim(3);
    if (H == target[0] && W == target[1] && L == target[2])
        return data;
    Tensor out({target[0], target[1], target[2], C});
    const auto src_coord = [](int64_t i, int64_t out_n, int64_t in_n) {
        double s = (static_cast<double>(i) + 0.5) * static_cast<double>(in_n) /
                       static_cast<double>(out_n) - 0.5;
        return std::clamp(s, 0.0, static_cast<double>(in_n - 1));
    };
    for (int64_t h = 0; h < target[0]; ++h) {
        const double sh = src_coord(h, target[0], H);
        const int64_t h0 = static_cast<int64_t>(sh), h1 = std::min(h0 + 1, H - 1);
        const double fh = sh - static_cast<double>(h0);
        for (int64_t w = 0; w < target[1]; ++w) {
            const double sw = src_coord(w, target[1], W);
            const int64_t w0 = static_cast<int64_t>(sw), w1 = std::min(w0 + 1, W - 1);
            const double fw = sw - static_cast<double>(w0);
            for (int64_t l = 0; l < target[2]; ++l) {
                const double sl = src_coord(l, target[2], L);
                const int64_t l0 = static_cast<int64_t>(sl), l1 = std::min(l0 + 1, L - 1);
                const double fl = sl - static_cast<double>(l0);
                for (int64_t c = 0; c < C; ++c) {
                    const double v000 = data.at(h0, w0, l0, c), v001 = data.at(h0, w0, l1, c);
                    const double v010 = data.at(h0, w1, l0, c), v011 = data.at(h0, w1, l1, c);
                    const double v100 = data.at(h1, w0, l0, c), v101 = data.at(h1, w0, l1, c);
                    const double v110 = data.at(h1, w1, l0, c), v111 = data.at(h1, w1, l1, c);
                    const double v00 = v000 + (v001 - v000) * fl;
                    const double v01 = v010 + (v011 - v010) * fl;
                    const double v10 = v100 + (v101 - v100) * fl;
                    const double v11 = v110 + (v111 - v110) * fl;
                    const double v0  = v00 + (v01 - v00) * fw;
                    const double v1  = v10 + (v11 - v10) * fw;
                    out.at(h, w, l, c) = v0 + (v1 - v0) * fh;
                }
            }
        }
    }
    return out;
}

}  // namespace

Volume preprocess(const Volume& v, std::array<int64_t, 3> target_shape) {
    for (int64_t d : target_shape)
        if (d < 1)
            throw ConfigError("preprocess: target dims must be >= 1");
    if (!v.data.all_finite())
        throw DataError("preprocess: volume contains non-finite values");

    const double lo = v.data.min();
    const double hi = v.data.max();

    // Already conforming: right shape and exact [-1, 1] range.
    if (v.data.dim(0) == target_shape[0] && v.data.dim(1) == target_shape[1] &&
        v.data.dim(2) == target_shape[2] && lo == -1.0 && hi == 1.0)
        return v;

    if (hi == lo)
        throw DataError("preprocess: degenerate constant-intensity volume (min == max)");

    Tensor shaped = center_crop(v.data, target_shape);
    shaped        = resample_trilinear(shaped, target_shape);

    Tensor out(shaped.shape());
    const double inv = 1.0 / (hi - lo);
    for (int64_t i = 0; i < shaped.numel(); ++i)
        out[i] = 2.0 * (shaped[i] - lo) * inv - 1.0;

    Volume result;
    result.data            = std::move(out);
    result.spacing         = v.spacing;
    result.intensity_range = {lo, hi};
    return result;
}

SemanticMap preprocess_map(const SemanticMap& m, std::array<int64_t, 3> target_shape) {
    m.validate();
    SemanticMap out;
    out.num_classes = m.num_classes;
    out.H = target_shape[0];
    out.W = target_shape[1];
    out.L = target_shape[2];
    out.labels.resize(static_cast<size_t>(out.H * out.W * out.L));

    // Crop offsets for larger axes; nearest-neighbor pick for smaller ones.
    const auto src_index = [](int64_t i, int64_t out_n, int64_t in_n) -> int64_t {
        if (in_n >= out_n)
            return i + (in_n - out_n) / 2;
        const double s = (static_cast<double>(i) + 0.5) * static_cast<double>(in_n) /
                             static_cast<double>(out_n) - 0.5;
        return std::clamp(static_cast<int64_t>(std::llround(s)), int64_t{0}, in_n - 1);
    };
    for (int64_t h = 0; h < out.H; ++h)
        for (int64_t w = 0; w < out.W; ++w)
            for (int64_t l = 0; l < out.L; ++l)
                out.at(h, w, l) = m.at(src_index(h, out.H, m.H), src_index(w, out.W, m.W),
                                       src_index(l, out.L, m.L));
    return out;
}

Tensor one_hot(const SemanticMap& m) {
    Tensor out({m.H, m.W, m.L, static_cast<int64_t>(m.num_classes)});
    for (int64_t s = 0; s < m.H * m.W * m.L; ++s) {
        const int32_t lab = m.labels[static_cast<size_t>(s)];
        if (lab < 0 || lab >= m.num_classes)
            throw DataError("one_hot: invalid label " + std::to_string(lab));
        out[s * m.num_classes + lab] = 1.0;
    }
    return out;
}

BatchSequence::BatchSequence(const DatasetManifest& manifest, int64_t batch_size, uint64_t seed)
    : n_(static_cast<int64_t>(manifest.entries.size())), batch_size_(batch_size), seed_(seed) {
    if (batch_size_ < 1)
        throw ConfigError("make_batches: batch_size must be >= 1");
    if (n_ == 0)
        throw DataError("make_batches: empty dataset manifest");
}

void BatchSequence::reshuffle() {
    ++epoch_;
    order_.resize(static_cast<size_t>(n_));
    for (int64_t i = 0; i < n_; ++i)
        order_[static_cast<size_t>(i)] = i;
    Rng rng(seed_ ^ Rng::fnv1a64("epoch." + std::to_string(epoch_)));
    rng.shuffle(order_);
    pos_ = 0;
}

std::vector<int64_t> BatchSequence::next() {
    if (epoch_ < 0 || pos_ >= order_.size())
        reshuffle();
    std::vector<int64_t> batch;
    while (pos_ < order_.size() && static_cast<int64_t>(batch.size()) < batch_size_)
        batch.push_back(order_[pos_++]);
    return batch;
}

// ---- toy data ----

PairedSample make_toy_sample(std::array<int64_t, 3> shape, int32_t num_classes, Rng& rng,
                             const std::string& id) {
    const int64_t H = shape[0], W = shape[1], L = shape[2];
    if (num_classes < 2)
        throw ConfigError("toy dataset: num_classes must be >= 2");
    if (H < 8 || W < 8 || L < 4)
        throw DataError("toy dataset: shape " + shape_str({H, W, L}) +
                        " too small to contain a structure (need >= 8x8x4)");

    PairedSample sample;
    sample.id = id;
    sample.volume.data = Tensor({H, W, L, 1});
    sample.volume.spacing = {1.0, 1.0, 1.0};
    sample.map.H = H;
    sample.map.W = W;
    sample.map.L = L;
    sample.map.num_classes = num_classes;
    sample.map.labels.assign(static_cast<size_t>(H * W * L), 0);

    // Smooth background, strictly below the foreground threshold.
    const double ph = rng.uniform(), pw = rng.uniform(), pl = rng.uniform();
    constexpr double kPi = 3.14159265358979323846;
    for (int64_t h = 0; h < H; ++h)
        for (int64_t w = 0; w < W; ++w)
            for (int64_t l = 0; l < L; ++l) {
                const double field = std::sin(2.0 * kPi * (h / double(H) + ph)) *
                                     std::sin(2.0 * kPi * (w / double(W) + pw)) *
                                     std::sin(2.0 * kPi * (l / double(L) + pl));
                sample.volume.data.at(h, w, l, 0) = -0.72 + 0.08 * field;
            }

    // One ellipsoid per structure class; each class gets its own intensity
    // band above the threshold, brightest at the center.
    const int32_t n_structs = num_classes - 1;
    for (int32_t c = 1; c <= n_structs; ++c) {
        const double band_lo = -0.1 + 0.9 * static_cast<double>(c - 1) / n_structs;
        const double band_hi = band_lo + 0.72 / n_structs;

        const double rh = (0.12 + 0.10 * rng.uniform()) * double(H);
        const double rw = (0.12 + 0.10 * rng.uniform()) * double(W);
        const double rl = std::max(1.2, (0.18 + 0.12 * rng.uniform()) * double(L));
        const double ch = rh + 1.0 + rng.uniform() * (double(H) - 2.0 * (rh + 1.0));
        const double cw = rw + 1.0 + rng.uniform() * (double(W) - 2.0 * (rw + 1.0));
        const double cl = rl + 0.5 + rng.uniform() * (double(L) - 2.0 * (rl + 0.5));

        for (int64_t h = 0; h < H; ++h)
            for (int64_t w = 0; w < W; ++w)
                for (int64_t l = 0; l < L; ++l) {
                    const double dh = (h - ch) / rh, dw = (w - cw) / rw, dl = (l - cl) / rl;
                    const double rho = dh * dh + dw * dw + dl * dl;
                    if (rho <= 1.0) {
                        sample.map.at(h, w, l) = c;
                        sample.volume.data.at(h, w, l, 0) =
                            band_lo + (band_hi - band_lo) * (1.0 - rho);
                    }
                }
    }

    // Round to float32 so NIfTI float storage round-trips exactly.
    for (int64_t i = 0; i < sample.volume.data.numel(); ++i)
        sample.volume.data[i] =
            static_cast<double>(static_cast<float>(sample.volume.data[i]));
    sample.volume.intensity_range = {sample.volume.data.min(), sample.volume.data.max()};
    return sample;
}

DatasetManifest generate_toy_dataset(int64_t n, std::array<int64_t, 3> shape, int32_t num_classes,
                                     uint64_t seed, const std::string& out_dir,
                                     const std::string& split) {
    if (n < 1)
        throw ConfigError("toy dataset: n must be >= 1");
    std::filesystem::create_directories(out_dir);

    DatasetManifest manifest;
    manifest.seed = seed;
    Rng master(seed);
    for (int64_t i = 0; i < n; ++i) {
        std::ostringstream id;
        id << split << "_" << std::setfill('0') << std::setw(4) << i;
        Rng sample_rng = master.substream(static_cast<uint64_t>(i) + 1);
        PairedSample s = make_toy_sample(shape, num_classes, sample_rng, id.str());

        const std::string vol_path = out_dir + "/" + id.str() + "_img.nii";
        const std::string map_path = out_dir + "/" + id.str() + "_seg.nii";
        save_nifti(s.volume, vol_path);
        save_nifti(s.map, map_path, s.volume.spacing);
        manifest.entries.push_back({id.str(), vol_path, map_path, split});
    }
    save_manifest(manifest, out_dir + "/manifest_" + split + ".tsv");
    return manifest;
}

void save_manifest(const DatasetManifest& manifest, const std::string& path) {
    std::ofstream out(path);
    if (!out)
        throw DataError("manifest: cannot open " + path + " for writing");
    out << "# seed=" << manifest.seed << "\n";
    for (const auto& e : manifest.entries)
        out << e.id << "\t" << e.volume_path << "\t" << (e.map_path.empty() ? "-" : e.map_path)
            << "\t" << e.split << "\n";
    if (!out)
        throw DataError("manifest: write failed for " + path);
}

DatasetManifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        throw DataError("manifest: cannot open " + path);
    DatasetManifest manifest;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty())
            continue;
        if (line[0] == '#') {
            const auto pos = line.find("seed=");
            if (pos != std::string::npos)
                manifest.seed = std::stoull(line.substr(pos + 5));
            continue;
        }
        std::istringstream ls(line);
        ManifestEntry e;
        std::string map_field;
        if (!std::getline(ls, e.id, '\t') || !std::getline(ls, e.volume_path, '\t') ||
            !std::getline(ls, map_field, '\t') || !std::getline(ls, e.split))
            throw DataError("manifest: malformed line: " + line);
        e.map_path = map_field == "-" ? "" : map_field;
        manifest.entries.push_back(std::move(e));
    }
    if (manifest.entries.empty())
        throw DataError("manifest: no entries in " + path);
    return manifest;
}

std::vector<PairedSample> load_samples(const DatasetManifest& manifest,
                                       const std::string& split_filter) {
    std::vector<PairedSample> samples;
    for (const auto& e : manifest.entries) {
        if (!split_filter.empty() && e.split != split_filter)
            continue;
        PairedSample s;
        s.id     = e.id;
        s.volume = load_volume(e.volume_path);
        if (!e.map_path.empty()) {
            s.map = load_semantic_map(e.map_path);
            if (s.map.H != s.volume.height() || s.map.W != s.volume.width() ||
                s.map.L != s.volume.depth())
                throw ShapeError("paired sample " + e.id + ": map/volume shape mismatch");
        }
        samples.push_back(std::move(s));
    }
    return samples;
}

}  // namespace medlsdm
