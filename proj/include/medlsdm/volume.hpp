#ifndef MEDLSDM_VOLUME_HPP
#define MEDLSDM_VOLUME_HPP

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "medlsdm/rng.hpp"
#include "medlsdm/tensor.hpp"

namespace medlsdm {

// A 3D intensity volume. data is (H, W, L, C); spacing is millimeters per
// voxel; intensity_range keeps the pre-normalization (lo, hi) bounds.
struct Volume {
    Tensor data;
    std::array<double, 3> spacing{1.0, 1.0, 1.0};
    std::pair<double, double> intensity_range{0.0, 0.0};

    int64_t height() const { return data.dim(0); }
    int64_t width() const { return data.dim(1); }
    int64_t depth() const { return data.dim(2); }
    int64_t channels() const { return data.dim(3); }
};

struct SemanticMap {
    std::vector<int32_t> labels;  // H*W*L, row-major (H, W, L)
    int64_t H = 0, W = 0, L = 0;
    int32_t num_classes = 0;

    int32_t& at(int64_t h, int64_t w, int64_t l) {
        return labels[static_cast<size_t>((h * W + w) * L + l)];
    }
    int32_t at(int64_t h, int64_t w, int64_t l) const {
        return labels[static_cast<size_t>((h * W + w) * L + l)];
    }
    void validate() const;
};

struct PairedSample {
    Volume volume;
    SemanticMap map;
    std::string id;
};

struct ManifestEntry {
    std::string id;
    std::string volume_path;
    std::string map_path;  // empty when unlabeled
    std::string split;     // "train" / "test" / free-form tag
};

struct DatasetManifest {
    std::vector<ManifestEntry> entries;
    uint64_t seed = 0;
};

// Spatial preprocessing + per-volume min-max normalization to [-1, 1].
// Axes larger than the target are center-cropped, smaller axes are
// trilinearly resampled. A volume already at target shape whose data range
// is exactly [-1, 1] is returned unchanged.
Volume preprocess(const Volume& v, std::array<int64_t, 3> target_shape);

// Nearest-neighbor crop/resample for label maps.
SemanticMap preprocess_map(const SemanticMap& m, std::array<int64_t, 3> target_shape);

// (H, W, L, num_classes) indicator tensor.
Tensor one_hot(const SemanticMap& m);

// Seeded epoch permutations; every entry appears exactly once per epoch and
// the final batch of an epoch may be short.
class BatchSequence {
public:
    BatchSequence(const DatasetManifest& manifest, int64_t batch_size, uint64_t seed);
    std::vector<int64_t> next();  // indices into manifest.entries
    int64_t epoch() const { return epoch_; }

private:
    void reshuffle();
    int64_t n_;
    int64_t batch_size_;
    uint64_t seed_;
    int64_t epoch_ = -1;
    size_t pos_    = 0;
    std::vector<int64_t> order_;
};

// ---- procedural toy data ----

// Intensity strictly above this marks structure voxels; the generator keeps
// background strictly below it, so label regions coincide exactly with the
// elevated-intensity regions.
inline constexpr double kToyForegroundThreshold = -0.5;

// One sample: smooth background plus one ellipsoid per non-background class,
// each class in its own intensity band.
PairedSample make_toy_sample(std::array<int64_t, 3> shape, int32_t num_classes, Rng& rng,
                             const std::string& id);

// Writes n paired NIfTI samples plus a manifest under out_dir.
DatasetManifest generate_toy_dataset(int64_t n, std::array<int64_t, 3> shape, int32_t num_classes,
                                     uint64_t seed, const std::string& out_dir,
                                     const std::string& split = "train");

void save_manifest(const DatasetManifest& manifest, const std::string& path);
DatasetManifest load_manifest(const std::string& path);

// Loads every entry of a manifest (optionally a single split). Entries
// without maps get an empty SemanticMap (num_classes 0).
std::vector<PairedSample> load_samples(const DatasetManifest& manifest,
                                       const std::string& split_filter = "");

}  // namespace medlsdm

#endif
