#ifndef MEDLSDM_MONTAGE_HPP
#define MEDLSDM_MONTAGE_HPP

#include <string>

#include "medlsdm/volume.hpp"

namespace medlsdm {

// Slice-grid rendering to binary PGM: one row per anatomical plane
// (axial / coronal / sagittal), `cols` evenly spaced slices per row.
// Volume intensities map [-1, 1] -> [0, 255]; labels spread over gray levels.
void write_montage(const Volume& v, const std::string& path, int64_t cols = 8);
void write_montage(const SemanticMap& m, const std::string& path, int64_t cols = 8);

}  // namespace medlsdm

#endif
