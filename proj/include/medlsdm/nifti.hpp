#ifndef MEDLSDM_NIFTI_HPP
#define MEDLSDM_NIFTI_HPP

#include <string>

#include "medlsdm/volume.hpp"

namespace medlsdm {

// Single-file little-endian NIfTI-1 (.nii), datatypes uint8 / int16 /
// float32, no affine handling. Axis mapping: file x = H (fastest), y = W,
// z = L, t = C.
enum class NiftiDtype : int16_t {
    Uint8   = 2,
    Int16   = 4,
    Float32 = 16,
};

struct NiftiImage {
    Tensor data;  // (H, W, L, C)
    std::array<double, 3> spacing{1.0, 1.0, 1.0};
    NiftiDtype dtype = NiftiDtype::Float32;
};

NiftiImage load_nifti(const std::string& path);

Volume load_volume(const std::string& path);

// Requires an integer-typed file; num_classes defaults to max label + 1.
SemanticMap load_semantic_map(const std::string& path, int32_t num_classes = 0);

// Values are cast to the requested dtype (llround for the integer types).
// Non-finite data is rejected before anything is written.
void save_nifti(const Volume& v, const std::string& path,
                NiftiDtype dtype = NiftiDtype::Float32);
void save_nifti(const SemanticMap& m, const std::string& path,
                std::array<double, 3> spacing = {1.0, 1.0, 1.0});

}  // namespace medlsdm

#endif
