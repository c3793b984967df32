#include "medlsdm/latent_space.hpp"

#include <algorithm>

#include "medlsdm/errors.hpp"

namespace medlsdm {

LatentRange codebook_range(const Codebook& codebook) {
    if (codebook.entries.numel() == 0)
        throw ConfigError("codebook_range: empty codebook");
    LatentRange r;
    r.lo = codebook.entries.min();
    r.hi = codebook.entries.max();
    if (!(r.hi > r.lo))
        throw DataError("codebook_range: degenerate range (collapsed codebook, lo == hi)");
    return r;
}

double minmax_map_scalar(double z, const LatentRange& range, MapDirection direction) {
    if (!(range.hi > range.lo))
        throw DataError("minmax_map: degenerate range");
    if (direction == MapDirection::Forward) {
        const double c = std::clamp(z, range.lo, range.hi);
        return 2.0 * (c - range.lo) / (range.hi - range.lo) - 1.0;
    }
    return range.lo + (z + 1.0) * 0.5 * (range.hi - range.lo);
}

Tensor minmax_map(const Tensor& z, const LatentRange& range, MapDirection direction) {
    if (!(range.hi > range.lo))
        throw DataError("minmax_map: degenerate range");
    Tensor out(z.shape());
    for (int64_t i = 0; i < z.numel(); ++i)
        out[i] = minmax_map_scalar(z[i], range, direction);
    return out;
}

}  // namespace medlsdm
